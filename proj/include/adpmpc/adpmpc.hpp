#pragma once

#include "adpmpc/errors.hpp"
#include "adpmpc/system.hpp"
#include "adpmpc/sampling.hpp"
#include "adpmpc/approximator.hpp"
#include "adpmpc/avi.hpp"
#include "adpmpc/certificates.hpp"
#include "adpmpc/mpc.hpp"
