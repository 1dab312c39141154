"""Partially reliable video streaming over a QUIC-style transport, in virtual time."""
