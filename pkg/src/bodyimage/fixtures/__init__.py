"""Built-in model files."""
