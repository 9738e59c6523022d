# Checkpoint, config and dataset file helpers
