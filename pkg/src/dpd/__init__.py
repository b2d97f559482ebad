"""Prototype-guided diffusion dataset distillation at desk scale.

Submodules, bottom up: :mod:`autodiff` (tensors, tape, Adam), :mod:`diffusion`
(schedule, forward process, DDIM), :mod:`codec` (DCT latent codec),
:mod:`conditioning` (captions and embeddings), :mod:`models` (denoiser and
classifier MLPs), :mod:`prototype` (k-means and margin selection),
:mod:`pipeline` (training and distillation), and the harness in
:mod:`data`, :mod:`evaluation`, :mod:`experiments`, :mod:`io`,
:mod:`reports` and :mod:`cli`.
"""
from .codec import DCTCodec
from .experiments import RunConfig
from .models import MLPImageClassifier
from .pipeline import DPDDistiller
from .prototype import PrototypeSelector

__all__ = ["DCTCodec", "DPDDistiller", "MLPImageClassifier", "PrototypeSelector", "RunConfig"]
__version__ = "0.1.0"
