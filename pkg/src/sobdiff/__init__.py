"""Diffusion policies trained with a first-order loss on solver feedback gains."""

__version__ = "0.1.0"
