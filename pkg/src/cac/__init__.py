"""Neighborhood-pair contrastive source-free domain adaptation."""
