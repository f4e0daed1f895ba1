"""Flow-aware temporal scene-graph generation with debiased relation learning."""

from . import evalkit, flowwarp, mln, numerics, relrep, synthdata, tfod, trainer

__version__ = "0.1.0"

__all__ = ["evalkit", "flowwarp", "mln", "numerics", "relrep", "synthdata", "tfod", "trainer"]
