# Per-query orchestration and worker pool
