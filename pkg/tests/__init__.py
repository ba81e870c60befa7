"""ConvFormer test suite."""
