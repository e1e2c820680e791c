# Copyright (c) qlonn Development Team.
# Distributed under the terms of the Modified BSD License.
