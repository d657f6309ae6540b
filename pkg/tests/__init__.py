# Test package for backdoorlab
