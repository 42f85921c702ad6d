"""Rendezvous, relay and authorization for reaching home gateways behind NAT,
with a deterministic network simulator to exercise it."""

__version__ = "0.1.0"
