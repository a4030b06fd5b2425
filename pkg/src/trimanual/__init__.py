"""Tri-manual harvesting planner: next-best-view placement of a carrier arm,
min-displacement bimanual reaching, fruit localization from depth and a
seeded harvest simulator."""

__version__ = "0.1.0"
