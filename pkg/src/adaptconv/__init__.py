"""Adaptive graph convolution for point clouds."""
