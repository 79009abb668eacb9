# Copyright 2024 Canonical Ltd.
# See LICENSE file for licensing details.
#
# Initialize unit tests
#

"""Unit tests run on coarse grids; the full-resolution checks live in tests/integration."""
