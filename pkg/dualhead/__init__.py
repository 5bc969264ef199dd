"""Toy dual-head transformer: one backbone, a retrieval head and a generation head."""
