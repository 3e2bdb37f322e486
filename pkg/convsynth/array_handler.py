"""This module reads and writes the array files of the reconstruction pipeline.

   Arrays are stored in the ``.npy`` format as 64-bit floats; complex arrays get a trailing axis
   of size 2 holding (re, im). Parameter bundles are directories with one ``.npy`` file per entry
   and a ``manifest.json``; PNG exports carry a JSON sidecar with the scaling used.
"""
import hashlib
import logging
import pathlib
import numpy as np
import torch
import matplotlib
import convsynth.config_handler as ch

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # pylint: disable=wrong-import-position

MANIFEST = "manifest.json"


def save_array(filename, array):
    """Takes an array or tensor and writes it as float64 .npy, complex as a trailing (re, im) axis.

       :parameter filename: Destination path
       :type filename: str or pathlib.Path
       :parameter array: Real or complex data
       :type array: numpy.ndarray or torch.Tensor
    """
    if isinstance(array, torch.Tensor):
        array = array.detach()
        array = torch.view_as_real(array.contiguous()) if array.is_complex() else array
        array = array.numpy()
    array = np.asarray(array)
    if np.iscomplexobj(array):
        array = np.stack([array.real, array.imag], axis=-1)
    if array.dtype != np.bool_:
        array = array.astype(np.float64)
    path = pathlib.Path(filename)
    path.parent.mkdir(parents=True, exist_ok=True)
    logging.debug("writing array %s with shape %s", path, array.shape)
    np.save(path, array, allow_pickle=False)


def load_array(filename, complex_valued: bool = False) -> np.ndarray:
    """Reads a .npy file; complex_valued folds the trailing (re, im) axis back into complex."""
    array = np.load(pathlib.Path(filename), allow_pickle=False)
    if complex_valued:
        if array.shape[-1] != 2:
            raise ValueError(f"{filename} has no trailing (re, im) axis")
        array = array[..., 0] + 1j * array[..., 1]
    return array


def load_complex_tensor(filename) -> torch.Tensor:
    """load_array for a complex image, returned as a complex128 tensor."""
    return torch.from_numpy(np.ascontiguousarray(load_array(filename, complex_valued=True)))


def save_bundle(directory, arrays: dict, manifest: dict):
    """Writes every entry of arrays as <name>.npy plus a manifest with their shapes."""
    directory = pathlib.Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    shapes = {}
    for name, array in arrays.items():
        save_array(directory / f"{name}.npy", array)
        shapes[name] = list(np.shape(array))
    ch.json_write(dict(manifest, arrays=shapes), directory / MANIFEST)


def load_bundle(directory) -> tuple:
    """Inverse of save_bundle, returns (arrays, manifest)."""
    directory = pathlib.Path(directory)
    manifest = ch.json_load(directory / MANIFEST)
    arrays = {name: np.load(directory / f"{name}.npy", allow_pickle=False)
              for name in manifest.get("arrays", {})}
    return arrays, manifest


def file_digest(filename) -> str:
    """sha256 of a file's bytes."""
    return hashlib.sha256(pathlib.Path(filename).read_bytes()).hexdigest()


def export_png(filename, image, vmin=None, vmax=None):
    """Writes a grey-scale PNG of a real plane and a sidecar JSON with the scaling used.

       :parameter filename: Destination, '.png' appended if missing
       :type filename: str or pathlib.Path
       :parameter image: Real 2D plane
       :type image: numpy.ndarray or torch.Tensor
       :parameter vmin: Value mapped to black, image minimum if omitted
       :type vmin: float, optional
       :parameter vmax: Value mapped to white, image maximum if omitted
       :type vmax: float, optional
    """
    if isinstance(image, torch.Tensor):
        image = image.detach().numpy()
    image = np.asarray(image, dtype=np.float64)
    vmin = float(image.min()) if vmin is None else float(vmin)
    vmax = float(image.max()) if vmax is None else float(vmax)
    if vmax <= vmin:
        vmax = vmin + 1.0
    path = pathlib.Path(filename)
    if path.suffix != ".png":
        path = path.with_suffix(".png")
    path.parent.mkdir(parents=True, exist_ok=True)
    plt.imsave(path, image, cmap="gray", vmin=vmin, vmax=vmax, format="png",
               metadata={"Software": None})
    ch.json_write({"vmin": vmin, "vmax": vmax, "shape": list(image.shape)},
                  path.with_suffix(".json"))
