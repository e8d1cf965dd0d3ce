"""Self-supervised scene flow estimation for sparse 4-D radar point clouds."""
