"""Tests for environment-driven harness settings."""

from config import Config


def test_defaults(monkeypatch):
    for name in ("CLOUDQOS_LOG_LEVEL", "CLOUDQOS_WORKERS", "CLOUDQOS_EVENT_DETAIL", "CLOUDQOS_EGRESS_PRICE"):
        monkeypatch.delenv(name, raising=False)
    cfg = Config()
    assert (cfg.log_level, cfg.workers, cfg.event_detail, cfg.egress_price) == ("INFO", 1, "standard", None)
    assert cfg.validate()


def test_bad_values_fail_validation(monkeypatch):
    monkeypatch.setenv("CLOUDQOS_EVENT_DETAIL", "verbose")
    assert not Config().validate()

    monkeypatch.setenv("CLOUDQOS_EVENT_DETAIL", "full")
    monkeypatch.setenv("CLOUDQOS_EGRESS_PRICE", "cheap")
    assert not Config().validate()

    monkeypatch.setenv("CLOUDQOS_EGRESS_PRICE", "0.05")
    monkeypatch.setenv("CLOUDQOS_WORKERS", "0")
    assert not Config().validate()


def test_unparsable_integer_falls_back(monkeypatch):
    monkeypatch.setenv("CLOUDQOS_DEFAULT_SEED", "seven")
    assert Config().default_seed == 1
