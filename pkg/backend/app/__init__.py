"""Dictionary-grounded tutor dialogue pipeline."""
