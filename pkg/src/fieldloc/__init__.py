"""Invert point-charge electric field measurements into 3-D positions.

Pipeline: simulate fields on a spatial grid (field_model), build a noisy
normalized dataset (dataset), train a small tanh network with Adam followed
by full-batch L-BFGS (network, optim, trainer), and report localization
errors in meters on held-out trajectories (evaluation). The cli module wires
the stages into reproducible experiment runs.
"""

__version__ = "0.1.0"
