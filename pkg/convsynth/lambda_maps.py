"""This module generates the spatially adaptive Lambda-maps weighting the l1 term of every feature
   map. Three sources share the call contract ``source(x0) -> LambdaMaps (K, h, w)``:

   - ConstantSource: one Softplus-activated scalar lambda for all maps;
   - HeuristicSource: training-free maps from the local standard deviation of |x0|;
   - MapNet: a small encoder-decoder CNN re-parametrized as t * sigmoid(u(x0)).

   Every source emits maps in (0, t].
"""
import dataclasses
import logging
import math
import pathlib
import typing
import numpy as np
import pandas as pd
import torch
from torch import nn
import torch.nn.functional as F
import convsynth.core as co
import convsynth.array_handler as ah
import convsynth.highpass as hp

LAMBDA_FLOOR = 1e-6
SOURCE_KINDS = ("constant", "heuristic", "network")


@dataclasses.dataclass(frozen=True)
class MapConfig:
    """Which Lambda-map source to use and its settings; bound is the upper bound t."""
    source: str = "network"
    bound: float = 10.0
    lambda_init: float = 0.5
    heuristic_scale: float = 1.0
    heuristic_window: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.source not in SOURCE_KINDS:
            raise ValueError(f"source must be one of {SOURCE_KINDS}, got {self.source!r}")
        if not self.bound > 0:
            raise ValueError(f"bound t must be positive, got {self.bound}")
        if not 0 < self.lambda_init <= self.bound:
            raise ValueError(f"lambda_init must lie in (0, t], got {self.lambda_init}")
        if self.source == "network" and self.lambda_init >= self.bound:
            raise ValueError("the network source needs lambda_init < t, since its sigmoid never "
                             "reaches t")
        if self.heuristic_window < 3 or self.heuristic_window % 2 == 0:
            raise ValueError(f"heuristic_window must be odd and >= 3, got "
                             f"{self.heuristic_window}")


def maps_constant(lam, num_filters: int, dims: tuple, bound: float = 10.0) -> torch.Tensor:
    """Takes a scalar lambda and returns K uniform maps of size dims.

       :parameter lam: Value in (0, bound], float or scalar tensor (gradients are kept)
       :type lam: float or torch.Tensor
       :parameter num_filters: Number of maps K
       :type num_filters: int
       :parameter dims: Map size (h, w)
       :type dims: tuple
       :parameter bound: Upper bound t
       :type bound: float, optional

       :return: LambdaMaps (K, h, w)
       :rtype: torch.Tensor
    """
    value = float(torch.as_tensor(lam).detach())
    if not 0 < value <= bound:
        raise ValueError(f"lambda must lie in (0, {bound}], got {value}")
    return torch.ones((num_filters,) + tuple(dims), dtype=co.REAL) * lam


def local_std(image: torch.Tensor, window: int) -> torch.Tensor:
    """Standard deviation over a periodic window x window neighbourhood of every pixel."""
    pad = window // 2
    planes = F.pad(image.reshape((1, 1) + tuple(image.shape)), (pad, pad, pad, pad),
                   mode="circular")
    mean = F.avg_pool2d(planes, window, stride=1)
    mean_sq = F.avg_pool2d(planes ** 2, window, stride=1)
    return torch.sqrt(torch.clamp(mean_sq - mean ** 2, min=0.0))[0, 0]


def maps_heuristic(x0: torch.Tensor, num_filters: int, scale: float = 1.0, window: int = 5,
                   bound: float = 10.0) -> torch.Tensor:
    """Training-free maps: low Lambda where |x0| varies locally, `scale` in flat regions.

       The local standard deviation of |x0| is normalized to [0, 1], inverted, multiplied by
       scale and clamped to [1e-6, bound]; the same plane is used for all K maps.
    """
    if window < 3 or window % 2 == 0:
        raise ValueError(f"window must be odd and >= 3, got {window}")
    magnitude = torch.abs(x0).to(co.REAL)
    spread = local_std(magnitude, window)
    peak = float(torch.max(spread))
    if peak <= 1e-6 * max(1.0, float(torch.max(magnitude))):  # rounding noise of a flat image
        normalized = torch.zeros_like(spread)
    else:
        normalized = spread / peak
    plane = torch.clamp(scale * (1.0 - normalized), min=LAMBDA_FLOOR, max=bound)
    return plane.unsqueeze(0).repeat(num_filters, 1, 1)


def _conv(in_channels: int, out_channels: int) -> nn.Conv2d:
    return nn.Conv2d(in_channels, out_channels, kernel_size=3, padding=1,
                     padding_mode="circular")


def _block(in_channels: int, out_channels: int) -> nn.Sequential:
    return nn.Sequential(_conv(in_channels, out_channels), nn.ReLU(),
                         _conv(out_channels, out_channels), nn.ReLU())


class MapNet(nn.Module):
    """Encoder-decoder u_Theta with stage widths 2-K-2K-4K-2K-K and Lambda = t * sigmoid(u(x0)).

       Two average-pooling stages, nearest-neighbour upsampling, skip concatenations at matching
       resolutions and periodic 3x3 convolutions. Parameters are float64 and initialized from
       seed. With lambda_init the output layer starts at zero weights and the bias
       logit(lambda_init / t), so the untrained network emits the constant map lambda_init.
    """
    kind = "network"

    def __init__(self, num_filters: int, bound: float = 10.0, seed: int = 0,
                 lambda_init: typing.Optional[float] = None):
        super().__init__()
        if not bound > 0:
            raise ValueError(f"bound t must be positive, got {bound}")
        if lambda_init is not None and not 0 < lambda_init < bound:
            raise ValueError(f"lambda_init must lie in (0, {bound}), got {lambda_init}")
        width = num_filters
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.enc1 = _block(2, width)
            self.enc2 = _block(width, 2 * width)
            self.bottom = _block(2 * width, 4 * width)
            self.dec2 = _block(4 * width + 2 * width, 2 * width)
            self.dec1 = _block(2 * width + width, width)
            self.head = _conv(width, width)
        self.double()
        if lambda_init is not None:
            with torch.no_grad():
                self.head.weight.zero_()
                self.head.bias.fill_(math.log(lambda_init / (bound - lambda_init)))
        self.num_filters = num_filters
        self.bound = float(bound)

    def pre_activation(self, x0: torch.Tensor) -> torch.Tensor:
        """u_Theta(x0) before the bounded sigmoid, shape (K, h, w)."""
        planes = torch.stack([x0.real, x0.imag]).to(co.REAL).unsqueeze(0)
        skip1 = self.enc1(planes)
        skip2 = self.enc2(F.avg_pool2d(skip1, 2))
        bottom = self.bottom(F.avg_pool2d(skip2, 2))
        up2 = self.dec2(torch.cat([F.interpolate(bottom, scale_factor=2, mode="nearest"), skip2],
                                  dim=1))
        up1 = self.dec1(torch.cat([F.interpolate(up2, scale_factor=2, mode="nearest"), skip1],
                                  dim=1))
        return self.head(up1)[0]

    def forward(self, x0: torch.Tensor) -> torch.Tensor:
        return cnn_forward(x0, self)


def cnn_forward(x0: torch.Tensor, net: MapNet) -> torch.Tensor:
    """Evaluates Lambda_k = t * sigmoid(u_Theta(x0))_k.

       :parameter x0: Network input image (h, w) with h and w divisible by 4
       :type x0: torch.Tensor
       :parameter net: The parameters Theta and the bound t
       :type net: MapNet

       :return: LambdaMaps (K, h, w) with entries in [1e-6, t]; the floor keeps the maps
           strictly positive where the sigmoid underflows
       :rtype: torch.Tensor

       :raise ValueError: Image dimensions not divisible by 4 or non-finite parameters
    """
    if x0.dim() != 2 or x0.shape[0] % 4 or x0.shape[1] % 4:
        raise ValueError(f"network input must be 2D with sides divisible by 4, "
                         f"got {tuple(x0.shape)}")
    for name, parameter in net.named_parameters():
        if not bool(torch.isfinite(parameter).all()):
            raise ValueError(f"network parameter {name} holds non-finite values")
    return torch.clamp(net.bound * torch.sigmoid(net.pre_activation(x0)), min=LAMBDA_FLOOR)


class ConstantSource(nn.Module):
    """Scalar lambda = clamp(softplus(raw_lambda), 1e-6, t) shared by every map."""
    kind = "constant"

    def __init__(self, num_filters: int, lambda_init: float = 0.5, bound: float = 10.0):
        super().__init__()
        self.num_filters = num_filters
        self.bound = float(bound)
        self.raw_lambda = nn.Parameter(torch.tensor(hp.inverse_softplus(lambda_init),
                                                    dtype=co.REAL))

    def value(self) -> torch.Tensor:
        """The activated, clamped lambda."""
        return torch.clamp(hp.softplus(self.raw_lambda), min=LAMBDA_FLOOR, max=self.bound)

    def forward(self, x0: torch.Tensor) -> torch.Tensor:
        return maps_constant(self.value(), self.num_filters, tuple(x0.shape), self.bound)


class HeuristicSource(nn.Module):
    """maps_heuristic wrapped in the source contract; it has no trainable parameters."""
    kind = "heuristic"

    def __init__(self, num_filters: int, scale: float = 1.0, window: int = 5,
                 bound: float = 10.0):
        super().__init__()
        self.num_filters = num_filters
        self.scale = scale
        self.window = window
        self.bound = float(bound)

    def forward(self, x0: torch.Tensor) -> torch.Tensor:
        return maps_heuristic(x0, self.num_filters, self.scale, self.window, self.bound)


MapSource = typing.Union[ConstantSource, HeuristicSource, MapNet]


def make_source(cfg: MapConfig, num_filters: int) -> MapSource:
    """Builds the source selected by cfg.source for a bank of num_filters filters."""
    logging.info("building %s Lambda-map source for K = %s", cfg.source, num_filters)
    if cfg.source == "constant":
        return ConstantSource(num_filters, cfg.lambda_init, cfg.bound)
    if cfg.source == "heuristic":
        return HeuristicSource(num_filters, cfg.heuristic_scale, cfg.heuristic_window, cfg.bound)
    return MapNet(num_filters, cfg.bound, cfg.seed, cfg.lambda_init)


def variance_order(lam: torch.Tensor) -> list:
    """Filter indices ordered by decreasing variance of their Lambda-maps."""
    variances = lam.detach().reshape(lam.shape[0], -1).numpy().var(axis=1)
    return sorted(range(lam.shape[0]), key=lambda k: (-float(variances[k]), k))


def rank_filters(lam: torch.Tensor) -> pd.DataFrame:
    """Per-filter mean and variance of the Lambda-maps, ordered by decreasing variance.

       High mean values mean a high threshold, i.e. filters contributing little to the
       representation of this image.

       :parameter lam: LambdaMaps (K, h, w)
       :type lam: torch.Tensor

       :return: Columns filter, mean, variance, rank
       :rtype: pandas.DataFrame
    """
    flat = lam.detach().reshape(lam.shape[0], -1).numpy()
    order = variance_order(lam)
    table = pd.DataFrame({"filter": order,
                          "mean": flat.mean(axis=1)[order],
                          "variance": flat.var(axis=1)[order]})
    table["rank"] = np.arange(1, len(order) + 1)
    return table


def save_source(source: MapSource, directory: str):
    """Writes the source parameters as an array bundle plus a JSON manifest."""
    manifest = {"kind": source.kind, "num_filters": source.num_filters, "bound": source.bound}
    if source.kind == "heuristic":
        manifest.update({"scale": source.scale, "window": source.window})
    arrays = {name: tensor.detach().numpy() for name, tensor in source.state_dict().items()}
    ah.save_bundle(directory, arrays, manifest)


def load_source(directory: str) -> MapSource:
    """Inverse of save_source."""
    arrays, manifest = ah.load_bundle(directory)
    kind = manifest.get("kind")
    if kind == "constant":
        source = ConstantSource(manifest["num_filters"], bound=manifest["bound"])
    elif kind == "heuristic":
        source = HeuristicSource(manifest["num_filters"], manifest["scale"], manifest["window"],
                                 manifest["bound"])
    elif kind == "network":
        source = MapNet(manifest["num_filters"], manifest["bound"])
    else:
        raise ValueError(f"unknown source kind {kind!r} in {pathlib.Path(directory)}")
    source.load_state_dict({name: torch.from_numpy(array) for name, array in arrays.items()})
    return source
