"""HTTP routes for span tables, retention replays, masks and verification."""
