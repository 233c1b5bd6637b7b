# Copyright © 2025 PI & Other Tales Inc.. All Rights Reserved.
"""Define any integration tests you want in this directory."""
