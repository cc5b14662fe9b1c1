"""C1 hierarchical isogeometric spaces on two-patch domains."""
