"""Core package for the backdoor poisoning laboratory."""

# Domain layer: pixel primitives, keys, datasets, training, metrics and defenses.
# The experiment surface lives in the harness package.
