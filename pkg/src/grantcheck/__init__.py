"""Permission vs Data Safety inconsistency detection."""
