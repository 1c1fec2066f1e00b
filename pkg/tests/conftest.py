import pytest


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "e2e: long-running end-to-end acceptance runs (kept last)"
    )


def pytest_collection_modifyitems(config, items):
    # the cross-validated end-to-end runs dominate wall time; run them after
    # everything fast has had its say
    items.sort(key=lambda item: 1 if item.get_closest_marker("e2e") else 0)
