"""Self-supervised fashion-compatibility embeddings from street photos, with
adversarial adaptation to catalog images."""

__version__ = "0.1.0"
