"""End-to-end spoken language understanding with a trainable speech-to-text Adaptor."""

__version__ = "0.1.0"
