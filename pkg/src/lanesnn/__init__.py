"""Spiking neural networks for lane-marking extraction from event-camera
frames, trained with backprop through the unrolled membrane dynamics and
deployable through a fixed-point inference simulator."""

__version__ = "0.1.0"
