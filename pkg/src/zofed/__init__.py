"""Forward-only federated learning simulator.

Clients estimate gradients from loss differences under shared Gaussian
parameter perturbations and upload only those K scalars.
"""

__version__ = "0.1.0"
