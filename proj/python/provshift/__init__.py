"""Provenance-shift benchmark: splits, synthetic data, 19 training algorithms, metrics."""

from ._core import (
    LOG_ALPHA_BASE,
    Dataset,
    Predictor,
    ProvshiftError,
    Splits,
    Trial,
    algorithms,
    auprc,
    decomposition_residual,
    default_hparams,
    ece,
    ece_from_p1,
    evaluate,
    fit_alpha_line,
    generate,
    is_two_stage,
    load_dataset,
    log_alpha,
    make_splits,
    rebalance,
    run_benchmark,
    run_trial,
    sample_hparams,
    save_dataset,
    solve_joint,
    stress_test,
    sweep_specs,
    worst_group,
)

__all__ = [name for name in dir() if not name.startswith("_")]
