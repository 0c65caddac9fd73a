"""Session-based click-out ranking: MF and GRU rankers, stacking, Borda, MRR."""

from .ranking import RankedList

__version__ = "0.1.0"
__all__ = ["RankedList"]
