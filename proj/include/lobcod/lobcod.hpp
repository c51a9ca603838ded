#pragma once

#include "lobcod/apps.hpp"
#include "lobcod/core.hpp"
#include "lobcod/dict_learn.hpp"
#include "lobcod/io.hpp"
#include "lobcod/lasso.hpp"
#include "lobcod/parallel.hpp"
#include "lobcod/pursuit.hpp"
