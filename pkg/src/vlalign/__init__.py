"""Desk-scale vision-language alignment: a from-scratch autodiff engine,
ViT encoder, query middleware, contrastive/generative objectives, a staged
trainer, and a full evaluation harness."""

__version__ = "0.1.0"
