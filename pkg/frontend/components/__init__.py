"""Explorer UI components: sidebar controls and result display."""
