#pragma once

// Umbrella header for the dynamic sequential decision forest library.

#include "dsdf/backbone.hpp"
#include "dsdf/checkpoint.hpp"
#include "dsdf/dataset.hpp"
#include "dsdf/errors.hpp"
#include "dsdf/explain.hpp"
#include "dsdf/forest.hpp"
#include "dsdf/hierarchy.hpp"
#include "dsdf/matrix.hpp"
#include "dsdf/tree.hpp"
