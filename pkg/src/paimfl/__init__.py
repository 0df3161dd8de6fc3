"""Three-layer federated learning simulator with a privacy-amplification pipeline."""
