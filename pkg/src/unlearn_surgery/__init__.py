"""One-shot VAE unlearning by gradient surgery, with influence-function and evaluation tooling."""

__version__ = "0.1.0"
