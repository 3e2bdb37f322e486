"""Convolutional synthesis reconstruction of undersampled MR images with learned spatially
   adaptive l1 weights.
"""
