"""Configuration, checkpoints, experiment drivers and the command line."""
