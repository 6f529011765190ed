from fiem.errors import ConfigurationError

# Default toy-model settings (the Gaussian linear latent model)
DEFAULT_TOY_SETTINGS = {
    "y_dim": 15,
    "p_dim": 10,
    "q_dim": 20,
    "rho": 0.8,
    "rho_tilde": 0.9,
    "sparsity": 0.4,
    "value_range": [-5.0, 5.0],
    "upsilon": 0.1,
}

# Default GMM settings (shared-covariance mixture)
DEFAULT_GMM_SETTINGS = {
    "g": 12,
    "p": 20,
    "batch_size": 100,
    "gamma": 5e-3,
    "epochs": 100,
    "kswitch": 6,
    "domain_policy": "warn",
    "report_epochs": [1, 15, 25, 50, 100],
}

# Named experiment presets. Values are overrides applied on top of the
# defaults above with dict.update().
DEFAULT_PRESETS = {
    "toy-full": {
        "kind": "toy",
        "n": 1000,
        "kmax_factor": 20,
        "replicas": 1000,
        "mu": 0.25,
        "lambda": 0.5,
        "algorithms": ["online-em", "fiem", "opt-fiem"],
        "compute_lambda_star": True,
        "track_theta_error": True,
    },
    "desk": {
        "kind": "toy",
        "n": 100,
        "kmax_factor": 20,
        "replicas": 100,
        "mu": 0.25,
        "lambda": 0.5,
        "algorithms": ["online-em", "fiem", "opt-fiem"],
        "compute_lambda_star": True,
        "track_theta_error": True,
    },
    "gmm-full": {
        "kind": "gmm",
        "g": 12,
        "p": 20,
        "batch_size": 100,
        "gamma": 5e-3,
        "epochs": 100,
        "kswitch": 6,
        "replicas": 10,
        "algorithms": ["em", "iem", "online-em", "h-fiem"],
    },
}

# Checkpoint grid of the toy experiments, as multiples of n
TOY_CHECKPOINT_FACTORS = [0.1, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 5.0, 6.0, 8.0, 10.0, 12.0, 15.0, 19.0]

# Fluctuation window, as multiples of n
FLUCTUATION_WINDOW_FACTORS = (1.5, 5.0)

# Accuracy bands of the epochs-to-accuracy report (relative gap)
ACCURACY_BANDS = [1e-2, 1e-3, 1e-4]


# Alternative names accepted for presets, check scales and check suites
PRESET_ALIASES = {"paper-fig7": "toy-full"}
SCALE_ALIASES = {"paper": "full"}
SUITE_ALIASES = {"theorem1": "descent", "prop2": "mean-field"}


def get_preset(name: str) -> dict:
    """Return a copy of a named preset merged over its kind's defaults."""
    name = PRESET_ALIASES.get(name, name)
    if name not in DEFAULT_PRESETS:
        raise ConfigurationError(f"Unknown preset '{name}'. Known: {sorted(DEFAULT_PRESETS)}")
    preset = DEFAULT_PRESETS[name]
    if preset["kind"] == "toy":
        merged = DEFAULT_TOY_SETTINGS.copy()
    else:
        merged = DEFAULT_GMM_SETTINGS.copy()
    merged.update(preset)
    return merged

# Replica counts of the `check` suites
CHECK_SCALES = {
    "desk": {"descent": 10000, "bound": 500, "mean_field": 100},
    "full": {"descent": 100000, "bound": 5000, "mean_field": 1000},
}
