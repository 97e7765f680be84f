"""Experiment orchestration: config, data, training, evaluation, commands, figures."""
