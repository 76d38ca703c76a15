"""Score-matching motion priors on a planar toy character."""
