# Test package for the integer Transformer engine
