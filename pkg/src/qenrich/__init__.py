"""Query-enriched neural code search: joint embeddings, seq2seq query
enrichment fine-tuned by actor-critic RL, and hybrid ranking."""

__version__ = "0.1.0"
