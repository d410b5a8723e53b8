"""sselab: a measurement workbench for memory-efficient encrypted indexes.

The package pairs dynamic searchable-encryption schemes with an
instrumented simulated server memory so that locality, read volume, page
patterns, and storage blow-up can be measured exactly at desk scale:

* ``allocator``  -- weighted two-choice allocation with per-tier decisions
* ``binned``     -- a dynamic page-efficient encrypted multimap
* ``clipped``    -- a one-choice bucket store that refuses overflow
* ``localidx``   -- the constant-locality composition of the two
* ``oram``       -- a hierarchical read-only oblivious memory
* ``tracing``    -- the traced page store and the derived measurements
* ``workbench``  -- seeded experiment driver with a plaintext oracle
"""

from .params import AllocParams, DEFAULT_LOAD_CONST, delta_for, llog
from .tracing import EfficiencyReport, OpMetrics, PageStore, RegionPlan, summarize

__version__ = "0.1.0"

__all__ = [
    "AllocParams",
    "DEFAULT_LOAD_CONST",
    "EfficiencyReport",
    "OpMetrics",
    "PageStore",
    "RegionPlan",
    "delta_for",
    "llog",
    "summarize",
    "__version__",
]
