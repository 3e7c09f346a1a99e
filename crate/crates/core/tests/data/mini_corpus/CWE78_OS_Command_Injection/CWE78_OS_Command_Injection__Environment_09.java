/* TEMPLATE GENERATED TESTCASE FILE
Filename: CWE78_OS_Command_Injection__Environment_09.java
Label Definition File: CWE78_OS_Command_Injection.label.xml
Template File: sources-sink-09.tmpl.java
*/
/*
* @description
* CWE: 78 OS Command Injection
* BadSource: Environment Read data from an untrusted source
* GoodSource: A hardcoded string
* Flow Variant: 09 (bad only)
*
* */

package testcases.CWE78_OS_Command_Injection;

import testcasesupport.*;
import java.io.*;
import java.util.*;

public class CWE78_OS_Command_Injection__Environment_09 extends AbstractTestCase
{
    public void bad() throws Throwable
    {
        String data = null;
        if (PRIVATE_STATIC_FINAL_FIVE == 5)
        {
            /* FLAW: data read from an untrusted source */
            data = System.getenv("ADD");
        }

        String osCommand = "/bin/ls ";
        /* POTENTIAL FLAW: command injection */
        Process process = Runtime.getRuntime().exec(osCommand + data);
        process.waitFor();
    }

    /* Below is the main(). It is only used when building this testcase on
     * its own for testing or for building a binary to use in testing binary
     * analysis tools. It is not used when compiling all the testcases as one
     * application, which is how source code analysis tools are tested.
     */
    public static void main(String[] args) throws ClassNotFoundException,
           InstantiationException, IllegalAccessException
    {
        mainFromParent(args);
    }
}
