"""A2C agent with a purpose-classifying Reasoner on a side-scrolling world."""

__version__ = "0.1.0"
