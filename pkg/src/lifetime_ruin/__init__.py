"""Minimal probability of lifetime ruin under proportional transaction costs."""
