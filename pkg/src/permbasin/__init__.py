"""Loss barriers between SGD solutions and the hidden-unit permutations that remove them."""

__version__ = "0.1.0"
