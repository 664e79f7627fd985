"""Discrete-event Wi-Fi MAC simulator with a DCF baseline and a QMIX-trained
multi-agent access policy."""

__version__ = "0.1.0"
