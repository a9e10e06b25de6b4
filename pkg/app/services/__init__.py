# Prompting, parsing, providers, aggregation, retrieval, evaluation and QERM
