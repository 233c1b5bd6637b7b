# Copyright © 2025 PI & Other Tales Inc.. All Rights Reserved.
"""Define any unit tests you may want in this directory."""
