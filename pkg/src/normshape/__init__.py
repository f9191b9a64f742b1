"""normshape: normative 3D shape modelling and abnormality detection on
binary organ masks."""

__version__ = "0.1.0"
