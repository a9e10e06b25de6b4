# Configuration and error hierarchy
