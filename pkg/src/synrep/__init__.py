"""Fully synthetic public-use microdata from complex survey samples.

The parent sample is expanded into pseudo-populations with the weighted
finite population Bayesian bootstrap, a simple random sample is drawn from
each, and synthetic replicates are simulated from models fit to those
samples. Released replicates are analysed with combining rules for the
many-replicates-per-sample (SynRep-R) and one-replicate-per-sample
(SynRep-1) designs.
"""
from .core import (
    CombinedEstimate,
    ParseError,
    PointVariance,
    ReplicateSet,
    SchemaError,
    StructureError,
    SynRepError,
    UnitRecord,
    Variant,
    VariantError,
    WeightedSample,
    read_replicates,
    read_sample,
    substream,
    write_replicates,
    write_sample,
)
from .inference import (
    EstimandSpec,
    ReplicateStatistics,
    combine_pseudo_pop,
    combine_pseudo_srs,
    combine_release,
    combine_synrep_1,
    combine_synrep_r,
    estimand_on_srs,
    interval,
)
from .synthesizer import SynthesizerSpec, synthesize_release
from .wfpbb import Mode, run_wfpbb_stage

__version__ = "0.1.0"
