"""Metrics, the synthetic world, and the experiment battery."""

from .metrics import (EvalReport, MetricError, average_precision, evaluate, macro_ap, mean_ap,
                      per_label_ap, top_k)
from .world import (BundleFormatError, FeatureBundle, SyntheticWorldSpec, World, WorldSpecError,
                    generate_world, label_closure, load_bundles, load_world, save_bundles, save_world)
