"""Python bindings for the neurofeedback harness core."""

from ._core import (
    EffectSize,
    NfbError,
    ToyServer,
    binarize,
    build_control_prompt,
    build_report_prompt,
    cohens_d,
    control_precision,
    counterbalanced_conditions,
    fit_logistic,
    fit_pca,
    load_corpus,
    median_threshold,
    ordinal_bin,
    quantile_bins,
    run_conformance,
    select_layers,
    toy_forward,
    toy_model_info,
)

__all__ = [
    "EffectSize",
    "NfbError",
    "ToyServer",
    "binarize",
    "build_control_prompt",
    "build_report_prompt",
    "cohens_d",
    "control_precision",
    "counterbalanced_conditions",
    "fit_logistic",
    "fit_pca",
    "load_corpus",
    "median_threshold",
    "ordinal_bin",
    "quantile_bins",
    "run_conformance",
    "select_layers",
    "toy_forward",
    "toy_model_info",
]
