"""CO-EVO federated re-identification simulator"""

__version__ = '0.1.0'
