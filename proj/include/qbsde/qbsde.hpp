#pragma once

#include "cli.hpp"
#include "config.hpp"
#include "driver.hpp"
#include "envelope.hpp"
#include "errors.hpp"
#include "estimates.hpp"
#include "gendsl.hpp"
#include "lqsolver.hpp"
#include "parallel.hpp"
#include "problem.hpp"
#include "qsolver.hpp"
#include "report.hpp"
#include "residual.hpp"
#include "structure.hpp"
#include "verify.hpp"
