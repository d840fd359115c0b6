"""Cross-domain few-shot hyperspectral classification with coalescent projections."""
