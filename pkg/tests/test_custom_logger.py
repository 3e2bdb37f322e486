import logging
import convsynth.custom_logger as cl


def test_logging_config_levels(tmp_path):
    settings = cl.logging_config(logging.WARNING, logging.INFO, tmp_path / "run.log")
    assert settings["handlers"]["console"]["level"] == logging.WARNING
    assert settings["handlers"]["run_log"]["level"] == logging.INFO
    assert settings["handlers"]["run_log"]["filename"] == str(tmp_path / "run.log")
    assert settings["root"]["level"] == logging.NOTSET
    assert set(settings["loggers"]) == set(cl.QUIET_LOGGERS)


def test_run_log_receives_module_messages(tmp_path):
    cl.logger_setup(logging.WARNING, logging.DEBUG, tmp_path / "run.log")
    logging.debug("power iteration estimate = %s", 2.5)
    logging.getLogger("matplotlib").info("font cache rebuilt")
    for handler in logging.getLogger().handlers:
        handler.flush()
    text = (tmp_path / "run.log").read_text(encoding="utf-8")
    assert "power iteration estimate = 2.5" in text
    assert "test_run_log_receives_module_messages" in text
    assert "font cache" not in text
    assert logging.getLogger("matplotlib").level == logging.WARNING
