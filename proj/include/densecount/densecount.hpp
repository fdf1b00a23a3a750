#pragma once

#include "densecount/annotations.hpp"
#include "densecount/config.hpp"
#include "densecount/density.hpp"
#include "densecount/density_map.hpp"
#include "densecount/error.hpp"
#include "densecount/image_io.hpp"
#include "densecount/nn.hpp"
#include "densecount/pipeline.hpp"
#include "densecount/png.hpp"
#include "densecount/synthgen.hpp"
#include "densecount/tensor.hpp"
#include "densecount/unet.hpp"
