"""covisim: desk-scale epidemic and risk-messaging simulator."""

__version__ = "0.1.0"
