"""Command implementations for the group-transformer CLI."""
