# Copyright 2022-2026 deepatlas-desk authors.
# Use of this source code is governed by the Apache 2.0 license that can be found
# in the LICENSE file.
