"""Desk-scale smart-city sensor streaming pipeline.

Components: HTTP collectors behind a round-robin balancer, a pub-sub stream
hub with a filtered storage stream, RAM-resident short-term location services,
a synthetic driver-load simulator, and a benchmark harness.
"""

__version__ = "0.1.0"
