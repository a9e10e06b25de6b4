# Artifact storage package
