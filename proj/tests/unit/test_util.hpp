#pragma once

#include <gtest/gtest.h>

#include <string>

#include "provshift/error.hpp"

// Runs stmt and checks that it throws provshift::Error with the given code.
#define EXPECT_ERROR_CODE(stmt, expected_code)                                      \
  do {                                                                              \
    bool thrown_ = false;                                                           \
    try {                                                                           \
      stmt;                                                                         \
    } catch (const provshift::Error& e_) {                                          \
      thrown_ = true;                                                               \
      EXPECT_EQ(e_.code(), std::string(expected_code)) << e_.what();                \
    }                                                                               \
    EXPECT_TRUE(thrown_) << "expected error " << (expected_code);                   \
  } while (0)
