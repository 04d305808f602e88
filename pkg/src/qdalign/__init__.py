"""qdalign: locate quantum emitters, register frames, analyze Stark maps.

The subpackages mirror the measurement chain: image preprocessing
(:mod:`imgproc`), synthetic scenes with ground truth (:mod:`synth`),
the shared least-squares engine (:mod:`fitcore`), marker, emitter and
waveguide fitting (:mod:`markers`, :mod:`emitters`, :mod:`waveguides`),
frame registration (:mod:`registration`) and spectral analysis
(:mod:`stark`).  The ``qdalign`` command line wires them together.
"""

from . import errors

__version__ = "0.1.0"

__all__ = ["errors", "__version__"]
