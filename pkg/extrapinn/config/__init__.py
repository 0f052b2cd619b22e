"""Configuration for the extrapinn package."""
