"""Joint graph representations of reactant pairs for energy regression.

Submodules are imported explicitly (``from dgnn import mpnn``); this file
stays free of heavy imports so the command line can configure thread
environment variables before numpy loads.
"""

__version__ = "0.1.0"
