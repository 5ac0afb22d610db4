"""Services package - forward/backward blocks, training and tooling."""
