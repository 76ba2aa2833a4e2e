"""Knowledge-base completion with graph-propagated translation embeddings.

Trains TransE-style entity/relation vectors through a neighborhood
propagation layer, classifies candidate triplets against per-relation
thresholds, and composes vectors for entities unseen at training time
from auxiliary triplets, without retraining.
"""

__version__ = "0.1.0"
