"""Training, evaluation, checkpointing and the command line."""
