"""Data models for the extrapinn package."""
