"""Concept extraction: saliency patches, composition, clustering and TCAV testing."""
