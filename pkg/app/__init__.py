# Query reformulation pipeline package
