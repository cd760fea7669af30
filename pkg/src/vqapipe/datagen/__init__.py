"""Synthetic training-data factory: ladders, proxy labels, patch groups."""

from .content import make_source
from .groups import (
    DUAL,
    SINGLE,
    GroupSet,
    PatchGroup,
    PatchRef,
    RankLabel,
    file_sha256,
    filter_outliers,
    generate_groups,
    load_group_arrays,
    read_manifest,
    sample_groups,
    write_manifest,
)
from .ladder import DistortedVersion, LadderSpec, build_ladder
from .operators import OPERATORS, ExternalOperator, Operator, get_operator, register_operator
from .proxy import ExternalCommandMetric, MSSSIMProxy, get_metric, proxy_metric, register_metric
from .resample import lanczos3_resample, lanczos3_resize, lanczos_kernel
from .store import Corpus, PatchStore, build_corpus
