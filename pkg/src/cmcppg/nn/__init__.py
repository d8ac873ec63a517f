"""A small numpy autograd core: tensors, layers, models, Adam, checkpoints."""
