"""Visual dubbing with a person-generic neural rendering prior.

Submodules: ``face_model``, ``reconstruction``, ``preprocessing``,
``neural_rendering``, ``training``, ``audio2expr``, ``postprocess``,
``evaluation`` and the ``pipeline``/``cli`` layer.
"""

__version__ = "0.1.0"
