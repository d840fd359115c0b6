from hsicdfsl.config import build_config

SMALL_VALUES = {
    "generator": {"height": "20", "width": "20", "bands": "10", "source_classes": "4",
                  "target_classes": "3", "patch_radius": "1"},
    "encoder": {"depth": "1", "embed_dim": "8", "heads": "2", "mlp_dim": "8",
                "patch_size": "3", "spectral_tokens": "2", "bands": "6", "patch_extent": "3"},
    "run": {"pca_bands": "6", "trials": "2", "source_episodes": "6", "warmup_episodes": "3",
            "e_outer": "2", "e_inner": "2", "split_steps": "1", "target_queries": "24",
            "q_query": "3"},
}


def small_config(**extra):
    values = {k: dict(v) for k, v in SMALL_VALUES.items()}
    for section, kv in extra.items():
        values.setdefault(section, {}).update({k: str(v) for k, v in kv.items()})
    return build_config(values)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
